"""Уточнение сегментации органов по неопределенности с помощью GCN"""
